use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::{save_checkpoint, Ablation, Trainer};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::phantom::{augment, augment_unlabeled, Dataset, Role, SegMask, Slice};
use crate::tensor::Tensor;

/// Training inputs. `labeled` feeds the segmentation loss (source phantoms,
/// or target annotations in `target_only` mode); `unlabeled` is the target
/// domain, used without masks.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<(Slice, SegMask)>,
    pub unlabeled: Vec<Slice>,
}

impl TrainData {
    /// Picks the datasets a mode trains on and enforces that unlabeled target
    /// data carries no masks.
    pub fn for_mode(
        mode: Ablation,
        source: Option<&Dataset>,
        target_train: Option<&Dataset>,
        target_oracle: Option<&Dataset>,
    ) -> Result<Self> {
        let pairs = |ds: &Dataset| -> Result<Vec<(Slice, SegMask)>> {
            ds.samples
                .iter()
                .map(|s| {
                    let m = s.mask.clone().ok_or_else(|| Error::Config(format!("{:?} sample without a mask", ds.role)))?;
                    Ok((s.slice.clone(), m))
                })
                .collect()
        };
        let missing = |what: &str| Error::Config(format!("mode {} needs the {what} dataset", mode.name()));
        if mode == Ablation::TargetOnly {
            let oracle = target_oracle.ok_or_else(|| missing("target oracle"))?;
            if oracle.role != Role::TargetOracle {
                return Err(Error::Config(format!("expected a target-oracle dataset, got {:?}", oracle.role)));
            }
            return Ok(Self { labeled: pairs(oracle)?, unlabeled: Vec::new() });
        }
        let source = source.ok_or_else(|| missing("source"))?;
        if source.role != Role::Source {
            return Err(Error::Config(format!("expected a source dataset, got {:?}", source.role)));
        }
        let mut data = Self { labeled: pairs(source)?, unlabeled: Vec::new() };
        if mode.adversarial() {
            let target = target_train.ok_or_else(|| missing("target-train"))?;
            if target.role != Role::TargetTrain || target.samples.iter().any(|s| s.mask.is_some()) {
                return Err(Error::Config("target-train data must be an unlabeled target-train dataset".into()));
            }
            data.unlabeled = target.samples.iter().map(|s| s.slice.clone()).collect();
        }
        Ok(data)
    }
}

/// One iteration's inputs: `[B, 1, H, W]` slices with flattened masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Tensor<f32>,
    pub mask: Vec<u8>,
    pub target: Option<Tensor<f32>>,
}

fn stack(slices: &[Slice]) -> Result<Tensor<f32>> {
    let (h, w) = (slices[0].height(), slices[0].width());
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape("batch slices differ in size".into()));
        }
        data.extend_from_slice(s.pixels());
    }
    Tensor::from_vec([slices.len(), 1, h, w], data)
}

/// Draws labeled and (when the mode uses it) unlabeled samples independently
/// and uniformly, each with its own augmentation seed.
pub fn sample_batch<R: Rng>(rng: &mut R, data: &TrainData, mode: Ablation, batch_size: usize, augment_on: bool) -> Result<Batch> {
    if data.labeled.is_empty() {
        return Err(Error::Config("no labeled training samples".into()));
    }
    let mut xs = Vec::with_capacity(batch_size);
    let mut mask = Vec::new();
    for _ in 0..batch_size {
        let (x, m) = &data.labeled[rng.random_range(0..data.labeled.len())];
        let seed: u64 = rng.random();
        let (x, m) = if augment_on { augment(x, m, seed)? } else { (x.clone(), m.clone()) };
        mask.extend_from_slice(m.labels());
        xs.push(x);
    }
    let target = if mode.adversarial() {
        if data.unlabeled.is_empty() {
            return Err(Error::Config("no unlabeled target samples".into()));
        }
        let mut xt = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let x = &data.unlabeled[rng.random_range(0..data.unlabeled.len())];
            let seed: u64 = rng.random();
            let x = if augment_on { augment_unlabeled(x, seed)? } else { x.clone() };
            xt.push(x);
        }
        Some(stack(&xt)?)
    } else {
        None
    };
    Ok(Batch { source: stack(&xs)?, mask, target })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub reports: Vec<LossReport>,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    iteration: u64,
    lr: f64,
    last_report: Option<&'a LossReport>,
}

/// Trains until `config.iterations`, resuming from the trainer's current
/// iteration. With `out`, appends one JSON line per iteration to `log.jsonl`,
/// writes periodic checkpoints under `checkpoints/` and `final.ckpt`. A
/// non-finite loss stops the run after writing `diagnostic.ckpt` and
/// `diagnostic.json`.
pub fn run(trainer: &mut Trainer, data: &TrainData, out: Option<&Path>) -> Result<RunSummary> {
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let f = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let cfg = trainer.config.clone();
    let mut summary = RunSummary::default();
    while trainer.state.iteration < cfg.iterations {
        let pre = trainer.state.clone();
        let batch = sample_batch(&mut trainer.state.rng, data, cfg.ablation, cfg.batch_size, cfg.augment)?;
        let report = match trainer.train_step(&batch) {
            Ok(r) if r.all_finite() => r,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                let err = Error::NonFinite { what: "loss".into(), iteration: pre.iteration };
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("diagnostic.ckpt"), &cfg, &pre)?;
                    let d = Diagnostic {
                        error: err.to_string(),
                        iteration: pre.iteration,
                        lr: trainer.lr(),
                        last_report: summary.reports.last(),
                    };
                    fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&d)? + "\n")?;
                }
                return Err(err);
            }
            Err(e) => return Err(e),
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            w.write_all(b"\n")?;
        }
        summary.reports.push(report);
        let it = trainer.state.iteration;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.iterations {
                log.as_mut().map(|w| w.flush()).transpose()?;
                save_checkpoint(&dir.join(format!("checkpoints/iter_{it:06}.ckpt")), &cfg, &trainer.state)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final.ckpt"), &cfg, &trainer.state)?;
    }
    summary.iterations = trainer.state.iteration;
    Ok(summary)
}

/// Reads a JSON-lines loss log.
pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() }))
        .collect()
}
