//! Overlap metrics under one-vs-rest binarization, per-slice aggregation with
//! normal-approximation 95% intervals, and test-set evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Networks, NUM_CLASSES};
use crate::params::ParamStore;
use crate::phantom::{Dataset, SegMask, Slice};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Binarizes both masks by membership in `positive`, then counts.
pub fn confusion(pred: &SegMask, gt: &SegMask, positive: &[u8]) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if positive.is_empty() || positive.iter().any(|&c| c == 0 || c as usize >= NUM_CLASSES) {
        return Err(Error::Config(format!("positive class set {positive:?} must be a nonempty subset of {{1, 2, 3}}")));
    }
    let mut member = [false; 256];
    positive.iter().for_each(|&c| member[c as usize] = true);
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (member[p as usize], member[g as usize]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `tp / (tp + fn)`; 1 when the ground truth has no positives.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// `tn / (tn + fp)`; 1 when the ground truth has no negatives.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

/// Evaluated rows. Infection merges GGO and consolidation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalClass {
    Ggo,
    Consolidation,
    Infection,
    Lung,
}

impl EvalClass {
    pub const ALL: [EvalClass; 4] = [EvalClass::Ggo, EvalClass::Consolidation, EvalClass::Infection, EvalClass::Lung];

    pub fn positive(self) -> &'static [u8] {
        match self {
            EvalClass::Ggo => &[2],
            EvalClass::Consolidation => &[3],
            EvalClass::Infection => &[2, 3],
            EvalClass::Lung => &[1],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EvalClass::Ggo => "GGO",
            EvalClass::Consolidation => "Consolidation",
            EvalClass::Infection => "Infection",
            EvalClass::Lung => "Lung",
        }
    }
}

/// Mean and 95% half-width over slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub half_width: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, half_width: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, half_width: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self { mean, half_width: 1.96 * var.sqrt() / (n as f64).sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: EvalClass,
    pub dice: Stat,
    pub sen: Stat,
    pub spe: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slices: usize,
    pub aggregation: String,
    pub interval: String,
    pub empty_mask_convention: String,
    pub rows: Vec<ClassRow>,
}

impl MetricReport {
    /// Aggregates per-slice `(pred, gt)` pairs.
    pub fn from_pairs(pairs: &[(SegMask, SegMask)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(EvalClass::ALL.len());
        for class in EvalClass::ALL {
            let (mut d, mut se, mut sp) = (Vec::new(), Vec::new(), Vec::new());
            for (p, g) in pairs {
                let c = confusion(p, g, class.positive())?;
                d.push(dice(&c));
                se.push(sensitivity(&c));
                sp.push(specificity(&c));
            }
            rows.push(ClassRow { class, dice: Stat::of(&d), sen: Stat::of(&se), spe: Stat::of(&sp) });
        }
        Ok(Self {
            slices: pairs.len(),
            aggregation: "per-slice mean".into(),
            interval: "normal approximation, 95% (z = 1.96)".into(),
            empty_mask_convention: "a metric with a zero denominator is 1".into(),
            rows,
        })
    }

    pub fn row(&self, class: EvalClass) -> Option<&ClassRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// Aligned text table, one row per class, values in percent.
    pub fn to_table(&self) -> String {
        let cell = |s: &Stat| format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * s.half_width);
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>15} {:>15} {:>15}", "Class", "Dice (%)", "Sen (%)", "Spe (%)");
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>15} {:>15} {:>15}", r.class.label(), cell(&r.dice), cell(&r.sen), cell(&r.spe));
        }
        let _ = writeln!(out, "({} slices, {}, {})", self.slices, self.aggregation, self.interval);
        out
    }
}

/// Per-pixel argmax of `[N, 4, H, W]` logits; ties go to the lowest class.
pub fn argmax_masks(logits: &Tensor<f32>) -> Result<Vec<SegMask>> {
    let [n, c, h, w] = logits.shape();
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} logit channels, got {c}")));
    }
    let d = logits.data();
    (0..n)
        .map(|s| {
            let labels = (0..h * w)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(s * c + k) * h * w + i] > d[(s * c + best) * h * w + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMask::new(h, w, labels)
        })
        .collect()
}

/// Segments one slice with the extractor and classifier only.
pub fn predict(nets: &Networks, extractor: &ParamStore<f32>, classifier: &ParamStore<f32>, x: &Slice) -> Result<SegMask> {
    let pyr = nets.extractor.extract(extractor, &x.to_tensor())?;
    let logits = nets.classifier.classify(classifier, &pyr)?;
    Ok(argmax_masks(&logits)?.remove(0))
}

/// Evaluates on every slice of a labeled dataset.
pub fn evaluate(
    nets: &Networks,
    extractor: &ParamStore<f32>,
    classifier: &ParamStore<f32>,
    test: &Dataset,
) -> Result<MetricReport> {
    let mut pairs = Vec::with_capacity(test.len());
    for s in &test.samples {
        let gt = s.mask.clone().ok_or_else(|| Error::Config("evaluation data must carry masks".into()))?;
        pairs.push((predict(nets, extractor, classifier, &s.slice)?, gt));
    }
    MetricReport::from_pairs(&pairs)
}
